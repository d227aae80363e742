//! Optimisation of quadratic-assignment objectives `⟨M^π, B⟩` over
//! permutations, and the quasi-MLE built on top of it.

use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{check_dims, Error, Result};
use crate::linalg::{sym_eigen, sym_inverse, Permutation, SymMatrix};
use crate::model::qap_objective;

/// Largest dimension accepted by [`exhaustive_search`].
pub const EXHAUSTIVE_MAX_DIM: usize = 9;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Sense {
    Min,
    Max,
}

impl Sense {
    /// True if `a` is strictly better than `b`.
    #[inline]
    fn better(self, a: f64, b: f64) -> bool {
        match self {
            Sense::Min => a < b,
            Sense::Max => a > b,
        }
    }

    /// Signed gain: positive when moving by `delta` improves the objective.
    #[inline]
    fn gain(self, delta: f64) -> f64 {
        match self {
            Sense::Min => -delta,
            Sense::Max => delta,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SearchMode {
    Exhaustive,
    Local,
}

#[derive(Clone, Debug)]
pub struct SearchOptions {
    pub mode: SearchMode,
    pub restarts: usize,
    pub max_sweeps: usize,
    /// Added to `Σ̂_X` before inversion. Off-model; zero by default.
    pub ridge: f64,
    pub seed: u64,
}

impl Default for SearchOptions {
    fn default() -> Self {
        Self { mode: SearchMode::Local, restarts: 16, max_sweeps: 200, ridge: 0.0, seed: 0 }
    }
}

impl SearchOptions {
    pub fn exhaustive() -> Self {
        Self { mode: SearchMode::Exhaustive, ..Self::default() }
    }
}

#[derive(Clone, Debug)]
pub struct SearchReport {
    pub permutation: Permutation,
    pub objective: f64,
    pub evaluations: u64,
    pub restarts_used: usize,
    pub sweeps: usize,
    /// Condition number of the inverted matrix (QMLE only).
    pub condition_number: Option<f64>,
}

/// Global optimum over all `d!` permutations; among exact ties the
/// lexicographically smallest permutation wins.
pub fn exhaustive_search(m: &SymMatrix, b: &SymMatrix, sense: Sense) -> Result<SearchReport> {
    check_dims(m.dim(), b.dim())?;
    let d = m.dim();
    if d > EXHAUSTIVE_MAX_DIM {
        return Err(Error::DimensionTooLarge { d, max: EXHAUSTIVE_MAX_DIM });
    }
    let mut p = Permutation::identity(d);
    let mut best = p.clone();
    let mut best_obj = qap_objective(m, b, &p)?;
    let mut evaluations = 1u64;
    while p.next_lexicographic() {
        let obj = qap_objective(m, b, &p)?;
        evaluations += 1;
        if sense.better(obj, best_obj) {
            best_obj = obj;
            best = p.clone();
        }
    }
    Ok(SearchReport { permutation: best, objective: best_obj, evaluations, restarts_used: 1, sweeps: 0, condition_number: None })
}

/// Change in `⟨M^π, B⟩` when the images of positions `r` and `s` are
/// exchanged. Only rows and columns `r`, `s` of `B` and of `M^π` move.
#[inline]
pub fn swap_delta(m: &SymMatrix, b: &SymMatrix, map: &[usize], r: usize, s: usize) -> f64 {
    let (pr, ps) = (map[r], map[s]);
    let mut acc = 0.0;
    for (k, &pk) in map.iter().enumerate() {
        if k == r || k == s {
            continue;
        }
        acc += (m.get(ps, pk) - m.get(pr, pk)) * (b.get(r, k) - b.get(s, k));
    }
    2.0 * acc + (m.get(ps, ps) - m.get(pr, pr)) * (b.get(r, r) - b.get(s, s))
}

/// Outcome of one hill climb.
#[derive(Clone, Debug)]
pub struct ClimbResult {
    pub permutation: Permutation,
    pub sweeps: usize,
    pub evaluations: u64,
}

/// Best-improvement 2-swap hill climbing from `start`. One sweep scans all
/// `d(d−1)/2` transpositions and applies the best strictly improving one.
pub fn two_swap_climb(m: &SymMatrix, b: &SymMatrix, sense: Sense, start: Permutation, max_sweeps: usize) -> Result<ClimbResult> {
    check_dims(m.dim(), b.dim())?;
    check_dims(m.dim(), start.len())?;
    let d = m.dim();
    // Gains below this are roundoff.
    let threshold = 1e-12 * (m.frobenius_norm() * b.frobenius_norm()).max(f64::MIN_POSITIVE);
    let mut pi = start;
    let mut sweeps = 0;
    let mut evaluations = 0u64;
    while sweeps < max_sweeps {
        sweeps += 1;
        let map = pi.as_slice();
        let mut best_gain = threshold;
        let mut best_pair = None;
        for r in 0..d {
            for s in (r + 1)..d {
                let g = sense.gain(swap_delta(m, b, map, r, s));
                evaluations += 1;
                if g > best_gain {
                    best_gain = g;
                    best_pair = Some((r, s));
                }
            }
        }
        match best_pair {
            Some((r, s)) => pi.swap_positions(r, s),
            None => break,
        }
    }
    Ok(ClimbResult { permutation: pi, sweeps, evaluations })
}

/// Best of `opts.restarts` hill climbs. Restart 0 starts at the identity;
/// restart `k ≥ 1` starts at a shuffle drawn from stream `k` of `opts.seed`.
pub fn local_search(m: &SymMatrix, b: &SymMatrix, sense: Sense, opts: &SearchOptions) -> Result<SearchReport> {
    check_dims(m.dim(), b.dim())?;
    let d = m.dim();
    let restarts = opts.restarts.max(1);
    let runs: Vec<(Permutation, f64, ClimbResult)> = (0..restarts)
        .into_par_iter()
        .map(|k| {
            let start = if k == 0 {
                Permutation::identity(d)
            } else {
                let mut rng = ChaCha8Rng::seed_from_u64(opts.seed);
                rng.set_stream(k as u64);
                let mut map: Vec<usize> = (0..d).collect();
                map.shuffle(&mut rng);
                Permutation::new(map).expect("shuffle is a bijection")
            };
            let climb = two_swap_climb(m, b, sense, start, opts.max_sweeps)?;
            let obj = qap_objective(m, b, &climb.permutation)?;
            Ok((climb.permutation.clone(), obj, climb))
        })
        .collect::<Result<_>>()?;

    let mut best: Option<&(Permutation, f64, ClimbResult)> = None;
    for run in &runs {
        best = match best {
            None => Some(run),
            Some(cur) if sense.better(run.1, cur.1) || (run.1 == cur.1 && run.0 < cur.0) => Some(run),
            keep => keep,
        };
    }
    let (permutation, objective, _) = best.expect("at least one restart").clone();
    Ok(SearchReport {
        permutation,
        objective,
        evaluations: runs.iter().map(|r| r.2.evaluations + 1).sum(),
        restarts_used: restarts,
        sweeps: runs.iter().map(|r| r.2.sweeps).sum(),
        condition_number: None,
    })
}

/// Quasi-MLE `argmin_π ⟨Σ̂_Y, (Σ̂_X^π)^{-1}⟩`. Inverts once, using
/// `(Σ̂_X^π)^{-1} = (Σ̂_X^{-1})^π`.
pub fn qmle_estimate(sigma_x: &SymMatrix, sigma_y: &SymMatrix, opts: &SearchOptions) -> Result<SearchReport> {
    check_dims(sigma_x.dim(), sigma_y.dim())?;
    if !(opts.ridge >= 0.0) {
        return Err(Error::InvalidArgument("ridge must be nonnegative".into()));
    }
    let regularized = sigma_x.add_ridge(opts.ridge);
    let m = sym_inverse(&regularized).map_err(|e| match e {
        Error::NotPositiveDefinite(msg) => Error::NotPositiveDefinite(format!(
            "sigma_x is not invertible ({msg}); QMLE needs m >= d samples, or set a ridge > 0"
        )),
        other => other,
    })?;
    let eig = sym_eigen(&regularized)?;
    let condition = eig.values.last().unwrap() / eig.values[0];
    let mut report = match opts.mode {
        SearchMode::Exhaustive => exhaustive_search(&m, sigma_y, Sense::Min)?,
        SearchMode::Local => local_search(&m, sigma_y, Sense::Min, opts)?,
    };
    report.condition_number = Some(condition);
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::instances::{robinson, wishart, Normalize};
    use crate::model::frob_loss;
    use rand::Rng;

    fn random_perm(d: usize, rng: &mut ChaCha8Rng) -> Permutation {
        let mut v: Vec<usize> = (0..d).collect();
        v.shuffle(rng);
        Permutation::new(v).unwrap()
    }

    #[test]
    fn exhaustive_examples() {
        let one = SymMatrix::identity(1);
        assert!(exhaustive_search(&one, &one, Sense::Max).unwrap().permutation.is_identity());
        let s = SymMatrix::from_diagonal(&[1.0, 4.0]);
        let r = exhaustive_search(&s, &s, Sense::Max).unwrap();
        assert!(r.permutation.is_identity());
        assert_eq!(r.objective, 17.0);
        assert_eq!(r.evaluations, 2);
        let big = SymMatrix::identity(10);
        assert!(matches!(exhaustive_search(&big, &big, Sense::Max), Err(Error::DimensionTooLarge { .. })));
    }

    #[test]
    fn exhaustive_matches_hand_table_3x3() {
        // M = diag(1,2,3), B = diag(3,1,2): ⟨M^π, B⟩ = Σ_i M[π(i)] B[i]
        let m = SymMatrix::from_diagonal(&[1.0, 2.0, 3.0]);
        let b = SymMatrix::from_diagonal(&[3.0, 1.0, 2.0]);
        // π = [0,1,2]:3+2+6=11 [0,2,1]:3+3+4=10 [1,0,2]:6+1+6=13
        // [1,2,0]:6+3+2=11 [2,0,1]:9+1+4=14 [2,1,0]:9+2+2=13
        let max = exhaustive_search(&m, &b, Sense::Max).unwrap();
        assert_eq!(max.permutation.as_slice(), &[2, 0, 1]);
        assert_eq!(max.objective, 14.0);
        let min = exhaustive_search(&m, &b, Sense::Min).unwrap();
        assert_eq!(min.permutation.as_slice(), &[0, 2, 1]);
        assert_eq!(min.objective, 10.0);
    }

    #[test]
    fn swap_delta_matches_recomputation() {
        let mut rng = ChaCha8Rng::seed_from_u64(31);
        for _ in 0..1000 {
            let d = rng.random_range(2..=9);
            let m = SymMatrix::from_upper_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let b = SymMatrix::from_upper_fn(d, |_, _| rng.random_range(-2.0..2.0));
            let pi = random_perm(d, &mut rng);
            let r = rng.random_range(0..d);
            let mut s = rng.random_range(0..d);
            while s == r {
                s = rng.random_range(0..d);
            }
            let mut moved = pi.clone();
            moved.swap_positions(r, s);
            let full = qap_objective(&m, &b, &moved).unwrap() - qap_objective(&m, &b, &pi).unwrap();
            assert!((swap_delta(&m, &b, pi.as_slice(), r, s) - full).abs() <= 1e-9);
        }
    }

    #[test]
    fn local_search_never_beats_exhaustive_and_usually_ties() {
        let mut ties = 0;
        for seed in 0..100 {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let a = wishart(6, &mut rng, Normalize::None).unwrap();
            let b = wishart(6, &mut rng, Normalize::None).unwrap();
            let ex = exhaustive_search(&a, &b, Sense::Max).unwrap();
            let opts = SearchOptions { seed, ..SearchOptions::default() };
            let loc = local_search(&a, &b, Sense::Max, &opts).unwrap();
            assert!(loc.objective <= ex.objective + 1e-9 * ex.objective.abs());
            if (loc.objective - ex.objective).abs() <= 1e-9 * ex.objective.abs() {
                ties += 1;
            }
        }
        assert!(ties >= 90, "ties {ties}");
    }

    #[test]
    fn flat_landscape_stops_after_one_sweep() {
        let i = SymMatrix::identity(5);
        let r = two_swap_climb(&i, &i, Sense::Max, Permutation::identity(5), 200).unwrap();
        assert_eq!(r.sweeps, 1);
        assert!(r.permutation.is_identity());
    }

    #[test]
    fn local_search_is_scale_invariant_in_b() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        for seed in 0..10 {
            let a = wishart(12, &mut rng, Normalize::Trace).unwrap();
            let b = wishart(12, &mut rng, Normalize::Trace).unwrap();
            let opts = SearchOptions { seed, restarts: 4, ..SearchOptions::default() };
            let r1 = local_search(&a, &b, Sense::Max, &opts).unwrap();
            let r2 = local_search(&a, &b.scaled(3.5), Sense::Max, &opts).unwrap();
            assert_eq!(r1.permutation, r2.permutation);
        }
    }

    #[test]
    fn qmle_examples() {
        let s = SymMatrix::from_diagonal(&[1.0, 4.0]);
        let r = qmle_estimate(&s, &s, &SearchOptions::exhaustive()).unwrap();
        assert!(r.permutation.is_identity());
        assert!((r.objective - 2.0).abs() < 1e-12);

        let sigma = robinson(6, 0.5).unwrap();
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let pi = random_perm(6, &mut rng);
        let y = sigma.perm_apply(&pi).unwrap();
        let r = qmle_estimate(&sigma, &y, &SearchOptions::exhaustive()).unwrap();
        assert!(frob_loss(&sigma, &r.permutation, &pi).unwrap() < 1e-12);
        assert!((r.objective - 6.0).abs() < 1e-8);
        assert!(r.condition_number.unwrap() >= 1.0);
    }

    #[test]
    fn qmle_rank_deficient_needs_ridge() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let sigma = SymMatrix::identity(5);
        let x = crate::model::sample_gaussian(&sigma, 3, &mut rng).unwrap();
        let sx = crate::model::sample_covariance(&x);
        let err = qmle_estimate(&sx, &sigma, &SearchOptions::default()).unwrap_err();
        assert!(matches!(err, Error::NotPositiveDefinite(ref msg) if msg.contains("ridge")));
        let opts = SearchOptions { ridge: 0.1, ..SearchOptions::default() };
        assert!(qmle_estimate(&sx, &sigma, &opts).is_ok());
    }

    #[test]
    fn single_inversion_identity() {
        let mut rng = ChaCha8Rng::seed_from_u64(44);
        for _ in 0..50 {
            let sx = wishart(7, &mut rng, Normalize::Opnorm).unwrap().add_ridge(0.01);
            let pi = random_perm(7, &mut rng);
            let lhs = sym_inverse(&sx.perm_apply(&pi).unwrap()).unwrap();
            let rhs = sym_inverse(&sx).unwrap().perm_apply(&pi).unwrap();
            assert!(lhs.sub(&rhs).unwrap().frobenius_norm() <= 1e-8 * rhs.frobenius_norm());
        }
    }
}
