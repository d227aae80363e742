//! Fiedler-vector seriation: sort the features by the Laplacian eigenvector
//! of the smallest nonzero eigenvalue. Only meaningful for Robinson-like
//! covariances, where that vector is monotone along the true order.

use nalgebra::DMatrix;

use crate::error::{check_dims, Error, Result};
use crate::linalg::{sym_eigen, Permutation, SymMatrix};

/// Eigenvalues with `|λ| ≤ ZERO_EIGEN_TOL · max|λ|` count as zero.
pub const ZERO_EIGEN_TOL: f64 = 1e-8;

#[derive(Clone, Debug)]
pub struct FiedlerResult {
    /// `ordering[k]` is the index holding the k-th smallest Fiedler entry.
    pub ordering: Permutation,
    pub fiedler_value: f64,
    /// Distance from the Fiedler value to the next eigenvalue (0 when degenerate).
    pub gap: f64,
    pub vector: Vec<f64>,
}

/// `L = diag(Σ 1) − Σ`.
pub fn laplacian(sigma: &SymMatrix) -> SymMatrix {
    let d = sigma.dim();
    let degrees: Vec<f64> = (0..d).map(|i| (0..d).map(|j| sigma.get(i, j)).sum()).collect();
    let mut l = DMatrix::from_fn(d, d, |i, j| -sigma.get(i, j));
    for i in 0..d {
        l[(i, i)] += degrees[i];
    }
    SymMatrix::symmetrized(l)
}

fn sort_order(v: &[f64]) -> Permutation {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    Permutation::new(idx).expect("sorted indices form a bijection")
}

pub fn fiedler_order(sigma_hat: &SymMatrix) -> Result<FiedlerResult> {
    let d = sigma_hat.dim();
    if d < 2 {
        return Err(Error::InvalidArgument("Fiedler ordering needs d >= 2".into()));
    }
    let eig = sym_eigen(&laplacian(sigma_hat))?;
    let scale = eig.values.iter().fold(0.0f64, |a, v| a.max(v.abs()));
    let zero = ZERO_EIGEN_TOL * scale;
    let pick = if scale > 0.0 { eig.values.iter().position(|&l| l > zero) } else { None };
    let Some(k) = pick else {
        return Ok(FiedlerResult {
            ordering: Permutation::identity(d),
            fiedler_value: 0.0,
            gap: 0.0,
            vector: vec![0.0; d],
        });
    };
    let mut vector = eig.column(k);
    // Fix the sign so the largest-magnitude entry is positive.
    let lead = vector.iter().copied().fold(0.0f64, |a, x| if x.abs() > a.abs() { x } else { a });
    if lead < 0.0 {
        vector.iter_mut().for_each(|x| *x = -*x);
    }
    let gap = eig.values.get(k + 1).map_or(0.0, |next| next - eig.values[k]);
    Ok(FiedlerResult { ordering: sort_order(&vector), fiedler_value: eig.values[k], gap, vector })
}

/// How the two Fiedler orderings are combined.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq)]
pub enum SpectralVariant {
    /// Seriate both covariances and align the two orders.
    #[default]
    TwoSided,
    /// Seriate only `Σ̂_Y` and assume `Σ̂_X` is already in Robinson order.
    OneSided,
}

/// Aligns `Σ̂_X` to `Σ̂_Y` through their Fiedler orders, choosing among the
/// reversal variants the one with the smallest residual `‖Σ̂_X^π̂ − Σ̂_Y‖_F`.
pub fn spectral_estimate(sigma_x: &SymMatrix, sigma_y: &SymMatrix) -> Result<Permutation> {
    spectral_estimate_with(sigma_x, sigma_y, SpectralVariant::TwoSided)
}

pub fn spectral_estimate_with(sigma_x: &SymMatrix, sigma_y: &SymMatrix, variant: SpectralVariant) -> Result<Permutation> {
    check_dims(sigma_x.dim(), sigma_y.dim())?;
    let d = sigma_x.dim();
    let oy = fiedler_order(sigma_y)?.ordering;
    let ox = match variant {
        SpectralVariant::TwoSided => fiedler_order(sigma_x)?.ordering,
        SpectralVariant::OneSided => Permutation::identity(d),
    };
    let rev = Permutation::reversal(d);
    let x_variants = [ox.clone(), ox.compose(&rev)?];
    let y_variants = [oy.clone(), oy.compose(&rev)?];
    select_by_residual(sigma_x, sigma_y, &x_variants, &y_variants)
}

/// Candidates `π̂ = o_X ∘ o_Y⁻¹`, so that `Σ̂_X^π̂` lines up with `Σ̂_Y`.
pub(crate) fn select_by_residual(
    sigma_x: &SymMatrix,
    sigma_y: &SymMatrix,
    x_orders: &[Permutation],
    y_orders: &[Permutation],
) -> Result<Permutation> {
    let mut best: Option<(f64, Permutation)> = None;
    for ox in x_orders {
        for oy in y_orders {
            let cand = ox.compose(&oy.invert())?;
            let resid = sigma_x.perm_apply(&cand)?.sub(sigma_y)?.frobenius_norm();
            if best.as_ref().is_none_or(|(r, _)| resid < *r) {
                best = Some((resid, cand));
            }
        }
    }
    Ok(best.expect("non-empty candidate set").1)
}
