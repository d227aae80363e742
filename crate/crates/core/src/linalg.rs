//! Dense symmetric matrices and permutation algebra.
//!
//! Conventions used throughout the crate:
//!
//! * `A^π` is the matrix with `(A^π)[i][j] = A[π(i)][π(j)]`, see [`SymMatrix::perm_apply`].
//! * Composition is `(π₁∘π₂)(i) = π₁(π₂(i))`, so `(A^π₁)^π₂ = A^(π₁∘π₂)`.
//! * The permutation matrix is `P[i][j] = 1{π(i) = j}`, giving `A^π = P A Pᵀ`.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{check_dims, Error, Result};

/// Relative asymmetry tolerated before construction rejects an input.
pub const ASYMMETRY_TOL: f64 = 1e-9;
/// Cholesky pivots at or below `PIVOT_FLOOR * trace / d` are treated as zero.
pub const PIVOT_FLOOR: f64 = 1e-12;
/// Eigenvalues at or below `EIGEN_FLOOR * max(λ)` are treated as zero.
pub const EIGEN_FLOOR: f64 = 1e-12;

const EIGEN_MAX_ITER: usize = 10_000;

/// A dense real symmetric matrix. Symmetry is exact: entry `(i, j)` and
/// `(j, i)` are bitwise equal.
#[derive(Clone, Debug, PartialEq)]
pub struct SymMatrix {
    m: DMatrix<f64>,
}

impl SymMatrix {
    /// Builds from a square matrix, rejecting inputs whose asymmetry exceeds
    /// [`ASYMMETRY_TOL`] relative to the largest entry and averaging the rest.
    pub fn new(m: DMatrix<f64>) -> Result<Self> {
        if m.nrows() != m.ncols() {
            return Err(Error::DimensionMismatch { expected: m.nrows(), found: m.ncols() });
        }
        if m.nrows() == 0 {
            return Err(Error::InvalidArgument("matrix dimension must be at least 1".into()));
        }
        if m.iter().any(|x| !x.is_finite()) {
            return Err(Error::NonFinite("matrix has non-finite entries".into()));
        }
        let scale = m.amax().max(f64::MIN_POSITIVE);
        let d = m.nrows();
        let mut dev = 0.0f64;
        for i in 0..d {
            for j in (i + 1)..d {
                dev = dev.max((m[(i, j)] - m[(j, i)]).abs());
            }
        }
        let deviation = dev / scale;
        if deviation > ASYMMETRY_TOL {
            return Err(Error::Asymmetric { deviation });
        }
        Ok(Self::symmetrized(m))
    }

    /// Averages `m` with its transpose without any tolerance check.
    pub fn symmetrized(mut m: DMatrix<f64>) -> Self {
        let d = m.nrows();
        assert_eq!(d, m.ncols(), "square matrix required");
        for i in 0..d {
            for j in (i + 1)..d {
                let avg = 0.5 * (m[(i, j)] + m[(j, i)]);
                m[(i, j)] = avg;
                m[(j, i)] = avg;
            }
        }
        Self { m }
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let d = rows.len();
        for row in rows {
            check_dims(d, row.len())?;
        }
        Self::new(DMatrix::from_fn(d, d, |i, j| rows[i][j]))
    }

    /// Builds from a function evaluated on the upper triangle only.
    pub fn from_upper_fn(d: usize, mut f: impl FnMut(usize, usize) -> f64) -> Self {
        let mut m = DMatrix::zeros(d, d);
        for i in 0..d {
            for j in i..d {
                let v = f(i, j);
                m[(i, j)] = v;
                m[(j, i)] = v;
            }
        }
        Self { m }
    }

    pub fn identity(d: usize) -> Self {
        Self { m: DMatrix::identity(d, d) }
    }

    pub fn zeros(d: usize) -> Self {
        Self { m: DMatrix::zeros(d, d) }
    }

    pub fn from_diagonal(diag: &[f64]) -> Self {
        let d = diag.len();
        Self { m: DMatrix::from_fn(d, d, |i, j| if i == j { diag[i] } else { 0.0 }) }
    }

    #[inline]
    pub fn dim(&self) -> usize {
        self.m.nrows()
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.m[(i, j)]
    }

    pub fn as_matrix(&self) -> &DMatrix<f64> {
        &self.m
    }

    pub fn into_matrix(self) -> DMatrix<f64> {
        self.m
    }

    pub fn to_rows(&self) -> Vec<Vec<f64>> {
        let d = self.dim();
        (0..d).map(|i| (0..d).map(|j| self.m[(i, j)]).collect()).collect()
    }

    pub fn trace(&self) -> f64 {
        self.m.trace()
    }

    pub fn scaled(&self, c: f64) -> Self {
        Self { m: &self.m * c }
    }

    pub fn add(&self, other: &SymMatrix) -> Result<Self> {
        check_dims(self.dim(), other.dim())?;
        Ok(Self { m: &self.m + &other.m })
    }

    pub fn sub(&self, other: &SymMatrix) -> Result<Self> {
        check_dims(self.dim(), other.dim())?;
        Ok(Self { m: &self.m - &other.m })
    }

    /// `self + c·I`.
    pub fn add_ridge(&self, c: f64) -> Self {
        let mut m = self.m.clone();
        for i in 0..self.dim() {
            m[(i, i)] += c;
        }
        Self { m }
    }

    /// `A^π` with `(A^π)[i][j] = A[π(i)][π(j)]`.
    pub fn perm_apply(&self, pi: &Permutation) -> Result<Self> {
        check_dims(self.dim(), pi.len())?;
        let map = pi.as_slice();
        let d = self.dim();
        Ok(Self { m: DMatrix::from_fn(d, d, |i, j| self.m[(map[i], map[j])]) })
    }

    pub fn inner(&self, other: &SymMatrix) -> Result<f64> {
        check_dims(self.dim(), other.dim())?;
        Ok(self.m.iter().zip(other.m.iter()).map(|(a, b)| a * b).sum())
    }

    pub fn frobenius_norm(&self) -> f64 {
        self.m.iter().map(|a| a * a).sum::<f64>().sqrt()
    }

    /// Largest absolute eigenvalue.
    pub fn op_norm(&self) -> Result<f64> {
        let eig = sym_eigen(self)?;
        Ok(eig.values.iter().fold(0.0f64, |acc, v| acc.max(v.abs())))
    }

    pub fn min_eigenvalue(&self) -> Result<f64> {
        Ok(sym_eigen(self)?.values[0])
    }
}

/// A bijection on `{0, …, d−1}`.
#[derive(Clone, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "Vec<usize>", into = "Vec<usize>")]
pub struct Permutation {
    map: Vec<usize>,
}

impl TryFrom<Vec<usize>> for Permutation {
    type Error = Error;

    fn try_from(map: Vec<usize>) -> Result<Self> {
        Permutation::new(map)
    }
}

impl From<Permutation> for Vec<usize> {
    fn from(p: Permutation) -> Self {
        p.map
    }
}

impl Permutation {
    pub fn new(map: Vec<usize>) -> Result<Self> {
        let d = map.len();
        let mut seen = vec![false; d];
        for &v in &map {
            if v >= d {
                return Err(Error::InvalidPermutation(format!("entry {v} out of range for length {d}")));
            }
            if std::mem::replace(&mut seen[v], true) {
                return Err(Error::InvalidPermutation(format!("entry {v} repeated")));
            }
        }
        Ok(Self { map })
    }

    pub fn identity(d: usize) -> Self {
        Self { map: (0..d).collect() }
    }

    /// The transposition of `a` and `b` on `{0, …, d−1}`.
    pub fn transposition(d: usize, a: usize, b: usize) -> Self {
        let mut map: Vec<usize> = (0..d).collect();
        map.swap(a, b);
        Self { map }
    }

    /// `i ↦ d−1−i`.
    pub fn reversal(d: usize) -> Self {
        Self { map: (0..d).rev().collect() }
    }

    #[inline]
    pub fn len(&self) -> usize {
        self.map.len()
    }

    #[inline]
    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    #[inline]
    pub fn as_slice(&self) -> &[usize] {
        &self.map
    }

    #[inline]
    pub fn at(&self, i: usize) -> usize {
        self.map[i]
    }

    pub fn is_identity(&self) -> bool {
        self.map.iter().enumerate().all(|(i, &v)| i == v)
    }

    pub fn invert(&self) -> Self {
        let mut inv = vec![0; self.len()];
        for (i, &v) in self.map.iter().enumerate() {
            inv[v] = i;
        }
        Self { map: inv }
    }

    /// `self ∘ other`, i.e. `i ↦ self(other(i))`.
    pub fn compose(&self, other: &Permutation) -> Result<Self> {
        check_dims(self.len(), other.len())?;
        Ok(Self { map: other.map.iter().map(|&j| self.map[j]).collect() })
    }

    /// Exchanges the images of positions `a` and `b`, i.e. `self ∘ (a b)`.
    pub fn swap_positions(&mut self, a: usize, b: usize) {
        self.map.swap(a, b);
    }

    /// Permutation matrix with `P[i][j] = 1{π(i) = j}`.
    pub fn matrix(&self) -> DMatrix<f64> {
        let d = self.len();
        DMatrix::from_fn(d, d, |i, j| if self.map[i] == j { 1.0 } else { 0.0 })
    }

    /// Steps to the next permutation in lexicographic order; returns false
    /// after the last one.
    pub fn next_lexicographic(&mut self) -> bool {
        let m = &mut self.map;
        let n = m.len();
        if n < 2 {
            return false;
        }
        let mut i = n - 1;
        while i > 0 && m[i - 1] >= m[i] {
            i -= 1;
        }
        if i == 0 {
            return false;
        }
        let mut j = n - 1;
        while m[j] <= m[i - 1] {
            j -= 1;
        }
        m.swap(i - 1, j);
        m[i..].reverse();
        true
    }
}

impl std::fmt::Display for Permutation {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "{:?}", self.map)
    }
}

/// Eigen-decomposition with eigenvalues ascending and eigenvectors stored as columns.
#[derive(Clone, Debug)]
pub struct EigenDecomposition {
    pub values: Vec<f64>,
    pub vectors: DMatrix<f64>,
}

impl EigenDecomposition {
    /// `V diag(f(λ)) Vᵀ`.
    pub fn reconstruct_with(&self, f: impl Fn(f64) -> f64) -> SymMatrix {
        let d = self.values.len();
        let mut scaled = self.vectors.clone();
        for (k, &lam) in self.values.iter().enumerate() {
            let s = f(lam);
            for i in 0..d {
                scaled[(i, k)] *= s;
            }
        }
        SymMatrix::symmetrized(&scaled * self.vectors.transpose())
    }

    pub fn column(&self, k: usize) -> Vec<f64> {
        self.vectors.column(k).iter().copied().collect()
    }
}

/// Lower-triangular `L` with `L Lᵀ = A` and positive diagonal.
pub fn cholesky(a: &SymMatrix) -> Result<DMatrix<f64>> {
    let d = a.dim();
    let floor = PIVOT_FLOOR * a.trace() / d as f64;
    let mut l = DMatrix::<f64>::zeros(d, d);
    for j in 0..d {
        let mut pivot = a.get(j, j);
        for k in 0..j {
            pivot -= l[(j, k)] * l[(j, k)];
        }
        if !(pivot > floor) || pivot <= 0.0 {
            return Err(Error::NotPositiveDefinite(format!(
                "Cholesky pivot {pivot:.3e} at index {j} is below floor {floor:.3e}"
            )));
        }
        let ljj = pivot.sqrt();
        l[(j, j)] = ljj;
        for i in (j + 1)..d {
            let mut s = a.get(i, j);
            for k in 0..j {
                s -= l[(i, k)] * l[(j, k)];
            }
            l[(i, j)] = s / ljj;
        }
    }
    Ok(l)
}

pub fn sym_eigen(a: &SymMatrix) -> Result<EigenDecomposition> {
    let eig = nalgebra::SymmetricEigen::try_new(a.m.clone(), f64::EPSILON, EIGEN_MAX_ITER)
        .ok_or_else(|| Error::ConvergenceFailure(format!("symmetric eigensolver exceeded {EIGEN_MAX_ITER} iterations")))?;
    let d = a.dim();
    let mut order: Vec<usize> = (0..d).collect();
    order.sort_by(|&x, &y| eig.eigenvalues[x].total_cmp(&eig.eigenvalues[y]).then(x.cmp(&y)));
    let values = order.iter().map(|&k| eig.eigenvalues[k]).collect();
    let vectors = DMatrix::from_fn(d, d, |i, c| eig.eigenvectors[(i, order[c])]);
    Ok(EigenDecomposition { values, vectors })
}

/// Inverse through the Cholesky factor.
pub fn sym_inverse(a: &SymMatrix) -> Result<SymMatrix> {
    let l = cholesky(a)?;
    let d = a.dim();
    // Solve L Lᵀ X = I column by column.
    let chol = nalgebra::Cholesky::pack_dirty(l);
    let inv = chol.solve(&DMatrix::identity(d, d));
    Ok(SymMatrix::symmetrized(inv))
}

/// `A^{-1/2}` through the eigen-decomposition.
pub fn sym_inv_sqrt(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eigen(a)?;
    let max = eig.values.last().copied().unwrap_or(0.0);
    let min = eig.values[0];
    if !(max > 0.0) || min <= EIGEN_FLOOR * max {
        return Err(Error::NotPositiveDefinite(format!(
            "smallest eigenvalue {min:.3e} is not positive relative to largest {max:.3e}"
        )));
    }
    Ok(eig.reconstruct_with(|l| 1.0 / l.sqrt()))
}

/// `A^{1/2}` for positive semidefinite input (negative roundoff clamped).
pub fn sym_sqrt(a: &SymMatrix) -> Result<SymMatrix> {
    let eig = sym_eigen(a)?;
    Ok(eig.reconstruct_with(|l| l.max(0.0).sqrt()))
}

pub fn inner(a: &SymMatrix, b: &SymMatrix) -> Result<f64> {
    a.inner(b)
}

pub fn frobenius_norm(a: &SymMatrix) -> f64 {
    a.frobenius_norm()
}

/// Frobenius norm of a general dense matrix.
pub(crate) fn fro(m: &DMatrix<f64>) -> f64 {
    m.iter().map(|a| a * a).sum::<f64>().sqrt()
}
